"""Turn labeled videos into feature grid datasets for the prototype trainer.

The exporter cuts each video into fixed-length clips, runs a 3D
convolutional backbone over every clip, and writes each clip's
pre-pooling feature map as a standalone grid file together with a dataset
manifest. It shares only file formats with the trainer, never code, so
either side can be swapped out independently.
"""

__version__ = "0.1.0"


class ExportError(Exception):
    """Raised for invalid jobs, unknown labels and inconsistent outputs."""


from .backbone import available_backbones, build_backbone
from .export import ExportJob, VideoItem, clip_starts, export

__all__ = [
    "ExportError",
    "ExportJob",
    "VideoItem",
    "available_backbones",
    "build_backbone",
    "clip_starts",
    "export",
]
