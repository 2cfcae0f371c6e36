"""
TVT-SR - Transfer VAE Training toolset for one-step super-resolution

"""
__copyright__ = "Copyright (c) 2025 TVT-SR contributors"
__version__ = "0.3"
