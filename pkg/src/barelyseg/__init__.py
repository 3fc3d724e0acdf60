"""Barely-supervised volumetric segmentation from single annotated slices.

Submodules: :mod:`voxel` (containers), :mod:`tensorcore` (autodiff),
:mod:`segnet`, :mod:`objectives`, :mod:`nfc` (slice-to-volume synthesis),
:mod:`fsx` (frequency and spatial mix-up), :mod:`trainer` (mean teacher),
:mod:`phantom`, :mod:`volume_io`, :mod:`experiments` and :mod:`cli`.
"""

__version__ = "0.1.0"
