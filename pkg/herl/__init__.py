"""
HERL simulator
Round-based federated learning under homomorphic-encryption overhead, with a
Q-learning agent choosing HE parameter plans per client tier.
"""

__version__ = "0.1.0"
