from .base import *
from .config_repo import *
from .click_repo import *
from .result_repo import *
