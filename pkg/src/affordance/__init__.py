"""Affordance-space learning over action, effect and object channels."""
