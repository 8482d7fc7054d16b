"""Continuously indexed domain adaptation."""
