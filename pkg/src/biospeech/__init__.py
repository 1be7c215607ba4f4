"""Biosignal-to-speech decoding toolkit.

Preprocessing of EEG/EMG recordings, phoneme-aligned MFCC targets, a
ConvBlock + bidirectional GRU decoder trained with a small reverse-mode
autodiff engine, and the evaluation/analysis suite around it.
"""

__version__ = "0.1.0"
