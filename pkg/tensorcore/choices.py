from django.db import models


class BaseChoices(models.TextChoices):
    @classmethod
    def get_values(cls):
        """Values accepted on the command line and in config files"""
        return [choice[0] for choice in cls.choices]


class Activation(BaseChoices):
    ELU = "elu", "ELU"
    SIGMOID = "sigmoid", "Sigmoid"
    TANH = "tanh", "Tanh"
