"""Progressive-learning causal CRNN for single-channel speech enhancement.

Submodules: ``tensor`` (autodiff), ``dsp`` (STFT/OLA), ``mixer`` (corpus
and SDR), ``targets`` (stage plans and losses), ``layers``/``model``
(network), ``trainer``, ``complexity`` (cost model) and ``cli``.
"""

__version__ = "0.1.0"
