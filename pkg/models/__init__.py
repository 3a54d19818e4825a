"""
Model modules: flow matching, DEM encoder, MCA UNet and text conditioning
"""
