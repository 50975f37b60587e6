"""A small IP telephony system: SIP proxy/registrar, B2BUA, softphone and test harness."""

__version__ = "0.1.0"
