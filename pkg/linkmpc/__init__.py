"""linkmpc - link-aware NMPC for a tilted multirotor tracking a ground vehicle."""

__version__ = "0.1.0"
