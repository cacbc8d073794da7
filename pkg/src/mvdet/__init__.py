"""Multi-view 3D object detection at desk scale.

A numpy library implementing a geometry-aware set-prediction detector:
learned object queries decode 3D reference points, which are projected
into every camera to sample multi-scale image features; predictions are
trained with a Hungarian set-to-set loss and scored with nuScenes-style
metrics. Everything runs on the CPU over a built-in reverse-mode
autodiff tape, on synthetic surround-camera scenes.
"""

__version__ = "0.1.0"
