"""gapracer: follow-the-gap racing with learned steering and a barrier filter.

A compact, numpy-only stack for 2D simulated racing: a raycast LiDAR
track simulator, a classical follow-the-gap expert, attentive
neural-process steering models trained by imitation on a from-scratch
autodiff engine, and a closed-form barrier-function safety filter.
"""

__version__ = "0.1.0"
