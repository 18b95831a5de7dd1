"""Desk-scale masked-token text-to-image pipeline.

Submodules: ``tensor`` (autodiff engine), ``nn`` (layers/optimizer),
``schedule`` (masking-rate and decode schedules), ``vq`` (image tokenizer),
``text`` (toy text encoder), ``backbone`` (the transformer), ``trainer``,
``sampler``, ``editor``, ``datagen`` (synthetic corpus), ``persistence``
(checkpoints and file formats), ``verify`` (self-check suites), ``cli``.
"""

import os

# Single-threaded BLAS: the work units here are small enough that thread
# fan-out loses outright, and a fixed reduction order keeps runs bit-stable.
# Must happen before numpy first loads, which is why it lives up here.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
