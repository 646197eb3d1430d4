"""idevc: disentangled style/content embeddings with mutual-information bounds.

Library layout:

- ``numcore``    dense float64 matrices with a reverse-mode autodiff tape
- ``mibounds``   sample-based MI bound estimators (NWJ, InfoNCE, CLUB and
                 the grouped/conditional/cross specializations)
- ``models``     MLP encoders, decoder and the Gaussian variational
                 approximator, plus text checkpoints
- ``synthdata``  synthetic grouped datasets with known ground-truth factors
- ``trainer``    alternating optimization of the full objective and the
                 zero-shot transfer operation
- ``evaluation`` DTW / DTW-MCD, verification accuracy, probes, reports
- ``cli``        command-line front end (``idevc gen|train|estimate-mi|
                 transfer|eval|probe``)

This module intentionally imports nothing heavy so that thread-count
environment variables can be pinned before numpy is loaded (see
``idevc._entry``).
"""

__version__ = "0.1.0"
