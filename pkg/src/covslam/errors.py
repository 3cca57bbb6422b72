"""Exception types shared across the package."""


class DegenerateFrameError(ValueError):
    """A frame produced no usable 3D points."""


class FormatError(ValueError):
    """A dataset or file on disk does not follow the expected layout."""


class TrackingLostError(RuntimeError):
    """Registration found too few correspondences.

    ``pose`` carries the last valid pose estimate.
    """

    def __init__(self, message, pose=None, n_pairs=0):
        super().__init__(message)
        self.pose = pose
        self.n_pairs = n_pairs
