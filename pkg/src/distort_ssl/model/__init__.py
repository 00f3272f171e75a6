"""Two-stage region network (backbone, RPN, box/class head, patch head) and its box utilities.

Torch-dependent pieces live in :mod:`.net` and :mod:`.checkpoint`; :mod:`.boxes`
is numpy-only so metrics can use it without importing torch.
"""
