"""Real-time restoration planning for distribution networks after disasters.

A genetic algorithm fixes crew routes and switch states; an augmented-
Lagrangian distributed MPC (optionally Aitken-accelerated) prices each
choice by coordinating per-subsystem dispatch QPs.
"""

__version__ = "0.1.0"
