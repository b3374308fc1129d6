"""
qbus: exact transforms, pulse design and a Fock-space oracle for modes
strongly coupled through a common bosonic channel.
"""

__version__ = "0.1.0"
