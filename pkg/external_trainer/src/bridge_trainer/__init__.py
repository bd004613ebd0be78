"""External trainer speaking the fedchain node bridge protocol.

This package shares no code with the node. It reimplements the wire
format from its documented layout and trains with torch, demonstrating
that a second ML stack can stand in for the built-in trainer.
"""
