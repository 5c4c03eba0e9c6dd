"""Learned full-reference speech quality scoring with a dilated causal convolution regressor.

The modules, from the signal end: :mod:`audio_io` (WAV and frames),
:mod:`spectral` (FFT, LTAS), :mod:`noise_lab` (speech-shaped noise, SNR
mixing), :mod:`grad_engine` (reverse-mode autodiff and Adam),
:mod:`pesqnet` (the regressor), :mod:`training`, :mod:`quality_loss` and
:mod:`cli`.
"""
from ._accel import backend_name
from .errors import WavePesqError

__version__ = "0.1.0"

__all__ = ["backend_name", "WavePesqError", "__version__"]
