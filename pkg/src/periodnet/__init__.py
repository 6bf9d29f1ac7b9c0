"""PeriodNet: non-autoregressive GAN vocoder with separate periodic and aperiodic generators."""

__version__ = "0.1.0"
