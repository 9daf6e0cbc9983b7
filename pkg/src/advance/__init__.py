"""Desk-scale campaign performance forecasting with evolving user interest.

Auction-level attention encoding plus a linear-complexity conditional
state-space summarizer, trained and validated end to end on a synthetic
real-time-bidding simulator.
"""

__version__ = "0.1.0"
