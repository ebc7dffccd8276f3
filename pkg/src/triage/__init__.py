"""Ticket triage: suggest contact types and reply templates for support tickets."""

__version__ = "0.1.0"
