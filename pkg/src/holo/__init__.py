"""holo: distributed telescope and honeypot platform.

A central controller orchestrates sensor agents over a hub-and-spoke
encrypted overlay. Agents run darknet capture, L4 responders, traffic
steering and trace collection; the analysis module computes traffic
metrics; simnet provides a deterministic simulated network for tests.
"""

__version__ = "0.1.0"
