"""Fine-grained class discovery from coarse labels.

Alternates between training a fine-grained MLP classifier and exactly
re-solving the binary fine-to-coarse relation matrix.
"""

__version__ = "0.1.0"
