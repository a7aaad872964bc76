"""Panel data quantile regression with grouped fixed effects."""
