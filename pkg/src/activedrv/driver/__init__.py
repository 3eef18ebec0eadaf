"""Driver modelling language: parsing, lowering and direct execution."""

from .ast import DriverProgram
from .cfg import CfgNode, DriverCfg, LoweringError, NodeKind, lower, well_formed
from .parser import DriverError, load_driver, parse_driver

__all__ = [
    "CfgNode", "DriverCfg", "DriverError", "DriverProgram", "LoweringError", "NodeKind",
    "load_driver", "lower", "parse_driver", "well_formed",
]
