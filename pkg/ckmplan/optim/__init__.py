from .ratemodel import LinkBudget, PlanState, check_feasibility, evaluate_plan_on_truth
from .jpbto import AoConfig, AoResult, CkmChannel, StatisticalChannel, default_endpoints, run_ao
