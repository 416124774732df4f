"""Capsule-vs-dense classifier experiments on synthetic micro-PCB boards."""

__version__ = "0.1.0"
