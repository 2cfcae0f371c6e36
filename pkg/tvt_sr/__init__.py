"""
TVT-SR - Transfer VAE Training toolset for one-step super-resolution

"""
from .__version__ import __version__, __copyright__
