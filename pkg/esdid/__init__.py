"""Event-study difference-in-differences estimators for designs with heterogeneous effects."""
