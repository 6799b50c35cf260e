"""Few-shot segmentation with EM-estimated prototype mixtures.

Library layout:

* :mod:`pmmseg.tensor` -- float64 tensors with reverse-mode autodiff
* :mod:`pmmseg.em` -- foreground/background prototype mixture estimation
* :mod:`pmmseg.pnm` -- bit-exact PGM/PPM image I/O
* :mod:`pmmseg.data` -- procedural multi-part shape dataset and episodes
* :mod:`pmmseg.net` -- duplex prototype activation network and checkpoints
* :mod:`pmmseg.train` -- episodic training, mIoU evaluation, ablations
* :mod:`pmmseg.cli` -- the ``pmmseg`` command-line front door
"""

from pmmseg.tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad"]
__version__ = "0.1.0"
