# guidg-mini: domain-expert ensembles at desk scale
