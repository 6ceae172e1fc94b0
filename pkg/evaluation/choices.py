from tensorcore.choices import BaseChoices


class EvalMode(BaseChoices):
    PIXEL = "pixel", "Pixel precision, recall and F1"
    GEOMETRIC = "geometric", "Alignment error in cm"
    TEMPORAL = "temporal", "Onset error table"
    ALL = "all", "Every measure"

    def includes(self, measure):
        return self == EvalMode.ALL or self == measure
