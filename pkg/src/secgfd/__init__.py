"""Semi-supervised graph fraud detection with a hybrid spectral filter bank.

Modules: ``graph`` (CSR graphs, Laplacians, heterophily, Rayleigh quotient),
``filterbank`` (beta-wavelet band-pass and high-pass bands), ``nn`` (tape
autograd, Adam), ``model`` (detector and losses), ``data`` (ingestion,
synthetic graphs, splits, reports), ``train``/``metrics``/``experiments``
and the ``cli`` entry point.
"""

__version__ = "0.1.0"
