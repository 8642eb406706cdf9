"""Low-resource online CTC speech recognition toolkit.

Spectrogram augmentation, domain adaptation (finetuning and linear input
networks) and pseudo-label distillation around a small numpy LSTM-CTC
acoustic model.
"""

__version__ = "0.1.0"
