import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'cord_lab.settings')
django.setup()
