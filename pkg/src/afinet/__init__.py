"""Attentive feature integration networks on a small numpy autodiff engine."""
