"""Rectified-flow editing (FlowEdit, pyramid and joint variants) and a video-editing evaluation harness."""

__version__ = "0.1.0"
