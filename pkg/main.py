# main.py
from src.utils.cli import app

if __name__ == "__main__":
    app()
