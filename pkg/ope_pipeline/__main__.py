# ope_pipeline/__main__.py
from ope_pipeline.cli import main

if __name__ == "__main__":
    main()
