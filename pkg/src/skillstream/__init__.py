"""skillstream: real-time multimodal surgical skill scoring at desk scale.

Ingests trial files (kinematics, gesture transcriptions, OSATS metadata, raw
frame containers), computes relative-motion features over sliding windows,
trains unimodal and fusion sequence models on a built-in autodiff core,
cross-validates with LOSO/LOUO/LOSI schemes, and serves per-window score
predictions over a streaming protocol. A synthetic trial generator makes the
whole pipeline testable without any proprietary recordings.
"""

__version__ = "0.1.0"
