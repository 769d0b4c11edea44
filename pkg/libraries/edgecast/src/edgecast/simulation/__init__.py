"""
Slot simulator: policies, the slot loop, traces, metrics and parameter sweeps.
"""
