"""Collector for Tor directory documents and OnionPerf results.

Discovers, downloads, archives, indexes and re-serves network status
documents (consensuses, votes, detached signatures), relay descriptors,
bandwidth lists and Torperf-format measurement results.
"""

__version__ = "0.1.0"
