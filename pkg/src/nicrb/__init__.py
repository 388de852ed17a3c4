"""Adversarial robustness benchmark for small neural image codecs.

Modules: ``autodiff`` (reverse-mode gradients over numpy), ``codecs`` (two
trainable toy codecs), ``attacks``, ``defenses``, ``metrics`` and
``harness`` (grid runner and reports). ``cli`` wires them to the command
line.
"""

__version__ = "0.1.0"
