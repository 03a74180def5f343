from .constants import VERSION as __version__
from .exceptions import *
from .market import *
from .utility import *
from .paths import *
from .endowment import *
from .bsde import *
from .fbsde import *
from .diagnostics import *
