"""Secure Chord-style overlay toolkit.

Address-derived ring keys, directory-backed authorization, two-tier
message authentication, self-policing peer groups, group-randomized
routing, a deterministic network simulator, and a benchmark harness.
"""

__version__ = "0.1.0"
