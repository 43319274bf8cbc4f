"""swapflow: identity swapping with a rectified-flow editor on a synthetic,
fully ground-truthed face benchmark.

Subpackages: synthdata (renderer + datasets), degradation (deblurring-proxy
operators), conditioning (identity encoder, attribute conditions), flowcore
(flow algebra, velocity net, sampling/inversion), training (teacher/student),
pseudotriplet (supervision tuples), evaluation (protocol + metrics),
analysis (inverted-noise PCA), cli (command-line entry point).
"""

__version__ = "0.1.0"
