"""
Distributionally robust and optimistic off-policy evaluation for finite MDPs.
"""

__version__ = "0.3.0"
