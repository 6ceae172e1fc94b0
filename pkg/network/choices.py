from tensorcore.choices import BaseChoices


class EncoderKind(BaseChoices):
    CB = "cb", "Context-based (40-frame window + LSTM)"
    FB = "fb", "Frame-based (single frame + LSTM)"
    NTC = "ntc", "No temporal context (40-frame window + dense)"

    @property
    def recurrent(self):
        return self != EncoderKind.NTC

    @property
    def uses_window(self):
        return self != EncoderKind.FB
