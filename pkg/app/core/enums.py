from enum import Enum


class RunMode(str, Enum):
    SINGLE = "single"
    MULTI = "multi"
    DISTANCE_STUDY = "distance-study"
    MATERIAL_TEST = "material-test"
    GRID_GEN = "grid-gen"


class Preset(str, Enum):
    PAPER = "paper"
    DESK = "desk"


class Ablation(str, Enum):
    NO_SHAPING = "no-shaping"
    NO_AUGMENTATION = "no-augmentation"
    NO_PER = "no-per"
    NO_DOUBLE = "no-double"
    NO_DUELING = "no-dueling"
    PURE_DQN = "pure-dqn"


class AssignmentWeighting(str, Enum):
    INVERSE_DISTANCE = "inverse_distance"
    PROPORTIONAL = "proportional"


class LossKind(str, Enum):
    HUBER = "huber"
    MSE = "mse"


class GoalValueKind(str, Enum):
    DUELING_VALUE = "dueling_value"
    MAX_Q = "max_q"


class TerminalReason(str, Enum):
    NONE = ""
    HORIZON = "horizon"
    STRAIN_CAP = "strain_cap"
    SIM_FAILURE = "sim_failure"


class SelectionType(str, Enum):
    GREEDY = "greedy"
    EXPLORE = "explore"
