"""Desk-scale sparse expert routing.

Subpackages:
  tensor_core   deterministic numerics, rng streams, bf16 emulation, grad checks
  router        top-1 routing, capacity budgeting, balance loss, rescue rerouting
  switch_layer  switch FFN plus dense / top-k / attention variants
  parallel_sim  logical-mesh execution with explicit collectives and byte ledgers
  trainer       toy masked-LM training, synthetic corpus, distillation
  cli           config parsing, seeded experiment runner, checkpoints
"""

from . import cli, parallel_sim, router, switch_layer, tensor_core, trainer

__all__ = ["tensor_core", "router", "switch_layer", "parallel_sim", "trainer", "cli"]
__version__ = "0.1.0"
