"""
Django settings for the piano synthesis project.

The project has no web surface: Django provides configuration, the run
registry (ORM + audit history) and the command line through management
commands (see app/performance/management/commands).
"""

import os
from pathlib import Path
from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent
REPO_ROOT = BASE_DIR.parent.parent

load_dotenv(REPO_ROOT / '.env')


SECRET_KEY = os.getenv('DJANGO_SECRET_KEY', 'piano-synth-local-key')

DEBUG = os.getenv('DJANGO_DEBUG', 'False') == 'True'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.auth',
    'django.contrib.contenttypes',
    'app.performance',
    'simple_history',
]


# Database
# PostgreSQL when configured, otherwise a local SQLite registry.

if os.getenv('POSTGRES_DB'):
    DATABASES = {
        'default': {
            'ENGINE': 'django.db.backends.postgresql',
            'NAME': os.getenv('POSTGRES_DB'),
            'USER': os.getenv('POSTGRES_USER'),
            'PASSWORD': os.getenv('POSTGRES_PASSWORD'),
            'HOST': os.getenv('POSTGRES_HOST', 'localhost'),
            'PORT': os.getenv('POSTGRES_PORT', '5432'),
        }
    }
else:
    DATABASES = {
        'default': {
            'ENGINE': 'django.db.backends.sqlite3',
            'NAME': os.getenv('PIANO_SYNTH_SQLITE', str(REPO_ROOT / 'piano_synth.sqlite3')),
        }
    }


LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'Europe/Berlin'

USE_I18N = True

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Logging

LOG_LEVEL = os.getenv('PIANO_SYNTH_LOG_LEVEL', 'INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'console': {
            'format': '%(asctime)s - %(levelname)s - [%(name)s] %(message)s',
            'datefmt': '%H:%M:%S',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'console',
        },
    },
    'loggers': {
        'app.performance': {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
    },
}


# Domain defaults. Command precedence: these < --config file < flags.

PIANO_SYNTH = {
    'WORKDIR': os.getenv('PIANO_SYNTH_WORKDIR', str(REPO_ROOT / 'work')),
    'SEED': int(os.getenv('PIANO_SYNTH_SEED', '0')),
    'GRID': {
        'sample_rate': int(os.getenv('PIANO_SYNTH_SAMPLE_RATE', '16000')),
        'hop_length': int(os.getenv('PIANO_SYNTH_HOP_LENGTH', '256')),
        'window_length': int(os.getenv('PIANO_SYNTH_WINDOW_LENGTH', '1024')),
        'mel_fmin': float(os.getenv('PIANO_SYNTH_MEL_FMIN', '30')),
        'mel_fmax': float(os.getenv('PIANO_SYNTH_MEL_FMAX', '8000')),
    },
    'SYNTHETIC_PIECE_SECONDS': float(os.getenv('PIANO_SYNTH_PIECE_SECONDS', '24')),
    'GRIFFIN_LIM_ITERATIONS': int(os.getenv('PIANO_SYNTH_GL_ITERATIONS', '64')),
}
