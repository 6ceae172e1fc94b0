"""
Django settings for the pagetrack project.

The project has no web surface: Django provides configuration, the app
registry, management commands and the test runner.
"""

from pathlib import Path
import os
from dotenv import load_dotenv

load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.getenv("SECRET_KEY", "pagetrack-local-only")
DEBUG = os.getenv("DEBUG", "0") == "1"
ALLOWED_HOSTS = []

# Application definition
INSTALLED_APPS = [
    "django.contrib.contenttypes",
    "django.contrib.auth",
    "rest_framework",
    "tensorcore.apps.TensorcoreConfig",
    "dsp.apps.DspConfig",
    "network.apps.NetworkConfig",
    "dataset.apps.DatasetConfig",
    "training.apps.TrainingConfig",
    "tracking.apps.TrackingConfig",
    "evaluation.apps.EvaluationConfig",
    "pipeline.apps.PipelineConfig",
]

DATABASES = {
    "default": {
        "ENGINE": "django.db.backends.sqlite3",
        "NAME": BASE_DIR / "db.sqlite3",
    }
}

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

USE_I18N = False
USE_TZ = True
TIME_ZONE = "UTC"


def _env_int(name, default):
    value = os.getenv(name)
    return int(value) if value not in (None, "") else default


# Pipeline defaults. Every value can be overridden by a run config file or
# by command-line flags (see pipeline.config.RunConfig).
PAGETRACK = {
    # audio
    "SAMPLE_RATE": 22050,
    "FPS": 20,
    "WINDOW_SIZE": 2048,
    "FMIN": 60.0,
    "FMAX": 6000.0,
    "N_BINS": 78,
    "BANDS_PER_OCTAVE": 12,
    # model
    "ENCODER": "cb",
    "BASE_FILTERS": 8,
    "DEPTH": 5,
    "FILM_BLOCKS": "BCDEFGH",
    "CONTEXT_FRAMES": 40,
    "EMBEDDING_SIZE": 32,
    "HIDDEN_SIZE": 128,
    "LAYER_NORM_EPS": 1e-5,
    # pages and targets
    "DOWNSCALE": 3,
    "DPI": 72,
    "MASK_WIDTH": 10,
    "THRESHOLD": 0.5,
    "CM_PER_PIXEL": 0.0352,
    # training
    "LEARNING_RATE": 1e-4,
    "WEIGHT_DECAY": 1e-5,
    "BATCH_SIZE": 4,
    "NTC_BATCH_SIZE": 64,
    "SEQ_LEN": 16,
    "LR_PATIENCE": 5,
    "STOP_PATIENCE": 10,
    "MAX_EPOCHS": 100,
    "MIN_IMPROVEMENT": 1e-5,
    "SHIFT_AUG_MAX": 10,
    "TEMPO_FACTORS": [0.5, 2 / 3, 5 / 6, 1.0, 7 / 6, 4 / 3, 1.5],
    "DICE_SMOOTH": 1.0,
    # evaluation
    "ONSET_THRESHOLDS": [0.05, 0.10, 0.50, 1.00, 5.00],
    # runtime
    "SEED": _env_int("PGTK_SEED", 0),
    "THREADS": _env_int("PGTK_THREADS", 0),
    "DATA_DIR": os.getenv("PGTK_DATA_DIR", str(BASE_DIR / "data")),
    "OUTPUT_DIR": os.getenv("PGTK_OUTPUT_DIR", str(BASE_DIR / "runs")),
    "RUN_SLOW_TESTS": os.getenv("PGTK_SLOW_TESTS", "0") == "1",
}

# Logging
LOG_LEVEL = os.getenv("PGTK_LOG_LEVEL", "INFO")
LOG_JSON = os.getenv("PGTK_LOG_JSON", "0") == "1"

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {
            "format": "%(asctime)s %(levelname)s %(name)s: %(message)s",
        },
        "json": {
            "()": "pythonjsonlogger.json.JsonFormatter",
            "fmt": "%(asctime)s %(levelname)s %(name)s %(message)s",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "json" if LOG_JSON else "plain",
        },
    },
    "root": {
        "handlers": ["console"],
        "level": LOG_LEVEL,
    },
}

# Celery
CELERY_BROKER_URL = os.getenv("CELERY_BROKER_URL", "memory://")
CELERY_ACCEPT_CONTENT = ["json"]
CELERY_TASK_SERIALIZER = "json"
CELERY_RESULT_SERIALIZER = "json"
CELERY_TIMEZONE = TIME_ZONE
CELERY_TASK_TRACK_STARTED = True
CELERY_TASK_ALWAYS_EAGER = os.getenv("CELERY_BROKER_URL") is None
