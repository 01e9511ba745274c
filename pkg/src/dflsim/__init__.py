"""Decentralized federated learning over packet-erasure channels.

Subpackages cover the device graph (`topology`), the link budget and
erasure model (`channel`), mixing-matrix construction (`consensus`), the
convergence-bound machinery and aggregation-schedule search (`analysis`),
the desk-scale training protocol and baselines (`flcore`), Monte Carlo
validation of the closed forms (`verify`), and the CLI (`cli`).
"""

__version__ = "0.1.0"
