"""Desk-scale trainable decoder over a synthetic visual world.

The point of this subpackage is not capability but verifiability: every stage
of the real pipeline (image compression, placeholder substitution, dual-stage
tuning, held-out identity evaluation, the modulation ablation) is reproduced
end to end in a form small enough to gradient-check and train in minutes.
"""
