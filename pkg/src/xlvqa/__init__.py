"""Synthetic multilingual VQA testbed.

A desk-scale experimental rig: seeded synthetic scenes and compositional
questions rendered into constructed languages, a small single-stream
multimodal transformer built on an in-house autodiff core, fine-tuning
strategies with parameter-group freeze/reset semantics, and diagnostic
protocols for measuring unimodal shortcuts and cross-lingual transfer gaps.
"""

__version__ = "0.1.0"
