"""Synthetic scenes, pipeline assembly, training and the robustness experiment."""
