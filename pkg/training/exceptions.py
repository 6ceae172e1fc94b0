from tensorcore.exceptions import PagetrackError


class TrainingAborted(PagetrackError):
    def __init__(self, reason, epoch=None, batch=None, pieces=(), lr=None):
        self.reason = reason
        self.epoch = epoch
        self.batch = batch
        self.pieces = tuple(pieces)
        self.lr = lr
        super().__init__(
            f"training aborted: {reason} (epoch {epoch}, batch {batch}, "
            f"pieces {', '.join(self.pieces) or '-'}, lr {lr})"
        )
