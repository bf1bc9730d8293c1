"""Desk-scale training lab for comparing next-token, multi-token, and
token-order-prediction objectives on a small transformer."""

__version__ = "0.1.0"
