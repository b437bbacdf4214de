# Value objects and error hierarchy
