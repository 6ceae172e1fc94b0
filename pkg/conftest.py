import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "pagetrack.settings")
django.setup()
