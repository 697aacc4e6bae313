from ._cfnet import *  # noqa: F401,F403
from ._cfnet import __doc__  # noqa: F401
