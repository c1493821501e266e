"""Keyword spotting with own-voice/external-speaker detection on simulated
two-microphone hearing-aid audio: corpus synthesis and spatial rendering,
MFCC front-end, a dilated residual multi-task network, seeded training with
dynamic loss weighting, and the evaluation/reporting pipeline."""

__version__ = "0.1.0"
