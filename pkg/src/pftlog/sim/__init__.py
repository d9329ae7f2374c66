"""Deterministic discrete-event simulation of a replica cluster."""
