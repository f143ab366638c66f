DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': ':memory:',
    },
}

INSTALLED_APPS = (
    'django.contrib.contenttypes',
    'django_flowcot',
)

SECRET_KEY = 'abcde12345'

USE_TZ = True

FLOWCOT_OUTPUT_DIR = 'runs'

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'handlers': {
        'console': {'class': 'logging.StreamHandler'},
    },
    'loggers': {
        'django_flowcot': {'handlers': ['console'], 'level': 'WARNING'},
    },
}
