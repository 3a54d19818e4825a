"""
Training loop, evaluation driver and ablation harness
"""
