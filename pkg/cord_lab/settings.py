"""
Django settings for the cord_lab experiment harness.

The project uses Django for configuration, logging and the management-command
CLI only; there is no web surface. Experiment hyperparameters live in plain
key=value config files (see training.config), not here.
"""

from pathlib import Path

from decouple import config
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = config('DJANGO_SECRET_KEY', default='cord-lab-local-only')

DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    # Local apps
    'autodiff',
    'policy',
    'tasks',
    'rollouts',
    'alignment',
    'training',
    'evaluation',
]

MIDDLEWARE = []


# Database
# The harness stores nothing relationally; SQLite keeps Django's checks happy.

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_TZ = True


# Logging
LOG_DIR = BASE_DIR / 'logs'
LOG_DIR.mkdir(exist_ok=True)

CORD_LOG_LEVEL = config('CORD_LOG_LEVEL', default='INFO')

LOCAL_APPS = ['cord_lab', 'autodiff', 'policy', 'tasks', 'rollouts', 'alignment', 'training', 'evaluation']

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {process:d} {thread:d} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'file': {
            'level': 'INFO',
            'class': 'logging.FileHandler',
            'filename': LOG_DIR / 'cord.log',
            'formatter': 'verbose',
        },
        'console': {
            'level': 'DEBUG',
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'root': {
        'handlers': ['console', 'file'],
        'level': 'WARNING',
    },
    'loggers': {
        'django': {
            'handlers': ['console', 'file'],
            'level': 'INFO',
            'propagate': False,
        },
        **{
            app: {
                'handlers': ['console', 'file'],
                'level': CORD_LOG_LEVEL,
                'propagate': False,
            }
            for app in LOCAL_APPS
        },
    },
}


# Experiment harness settings
CORD_THREADS = config('CORD_THREADS', default=1, cast=int)  # rollout worker cap
CORD_OUTPUT_ROOT = Path(config('CORD_OUTPUT_ROOT', default=str(BASE_DIR / 'runs')))
CORD_DEFAULT_PRECISION = config('CORD_DEFAULT_PRECISION', default='f32')
CORD_GRADCHECK_EPS = config('CORD_GRADCHECK_EPS', default=1e-5, cast=float)
