from tensorcore.exceptions import PagetrackError


class GenerationError(PagetrackError):
    """The requested synthetic layout does not fit on the page"""


class DatasetValidationError(PagetrackError):
    def __init__(self, errors):
        # piece id -> list of messages
        self.errors = errors
        lines = [f"{piece}: {message}" for piece, messages in sorted(errors.items()) for message in messages]
        super().__init__(f"{len(errors)} invalid piece(s)\n" + "\n".join(lines))
