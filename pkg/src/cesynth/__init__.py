"""Contrast-enhanced T1 synthesis from pre-contrast MRI with a 3D multi-branch FCN."""

__version__ = "0.1.0"
