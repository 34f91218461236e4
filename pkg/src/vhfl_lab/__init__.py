"""Desk-scale federated-learning laboratory.

Building blocks: a dense neural-network engine with exact backprop
(:mod:`vhfl_lab.nnet`), synthetic vertically+horizontally partitioned data
(:mod:`vhfl_lab.datagen`), the training engines (:mod:`vhfl_lab.fedcore`),
a hyper-exponential M/G/1 delay model with deadline planning
(:mod:`vhfl_lab.netqueue`), convergence-bound calculators
(:mod:`vhfl_lab.bounds`), and the experiment harness / CLI
(:mod:`vhfl_lab.harness`).
"""

__version__ = "0.1.0"
