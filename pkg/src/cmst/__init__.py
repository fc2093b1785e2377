"""Cross-modal retrieval by learning intra-modal similarities and transferring
them into a shared embedding space, trained adversarially."""

__version__ = "0.1.0"
