from .med3d_tools.med3derrors import Med3DError

__version__ = '0.1.0'
