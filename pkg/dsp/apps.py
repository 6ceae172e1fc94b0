from django.apps import AppConfig


class DspConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "dsp"
