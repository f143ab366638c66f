import os
from setuptools import find_packages, setup

from django_flowcot.version import VERSION

with open(os.path.join(os.path.dirname(__file__), 'README.rst')) as readme:
    README = readme.read()

# allow setup.py to be run from any path
os.chdir(os.path.normpath(os.path.join(os.path.abspath(__file__), os.pardir)))

setup(
    name='django-flowcot',
    version=VERSION,
    packages=find_packages(exclude=['examples', 'examples.*']),
    python_requires='>=3.8',
    install_requires=[
        'django>=3.2',
        'colorama>=0.4.4',
        'termcolor>=1.1.0',
        'torch>=2.0',
        'numpy>=1.21',
        'PyYAML>=5.4',
        'pandas>=1.3',
        'pydantic>=2.0',
    ],

    description='A Django app for training and evaluating recursive latent-reasoning transformers with '
                'per-iteration teacher distillation',
    long_description=README,
    keywords='django transformer distillation recursive reasoning cli',
    license='MIT',
)
