"""Desk-scale neural speaker diarization: NSD-MS2S with shared-and-soft MoE layers."""

__version__ = "0.1.0"
