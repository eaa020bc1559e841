"""RGB+event single-object tracking with density-driven selective state space blocks.

The package is self-contained: a float64 tape autodiff (``numerics``), event
voxelization and cropping (``events``), the selective scan and Mamba block
(``dssm``), cross-modal gated fusion (``gpf``), the tracking head with its
losses and metrics (``head``), and the training/evaluation harness.
"""
from .events import BBox, EventStream
from .model import MambaTrack, ModelConfig
from .synth import SynthConfig
from .train import TrainConfig

__all__ = ["BBox", "EventStream", "MambaTrack", "ModelConfig", "SynthConfig", "TrainConfig"]
__version__ = "0.1.0"
