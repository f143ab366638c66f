#!/usr/bin/env python
"""Runs the flowcot commands and the test suite against ``testsettings``.

    $ python manage.py train -c run.yaml -o runs/desk
    $ python manage.py test django_flowcot
"""
import os
import sys

if __name__ == "__main__":
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "testsettings")

    from django.core.management import execute_from_command_line

    execute_from_command_line(sys.argv)
