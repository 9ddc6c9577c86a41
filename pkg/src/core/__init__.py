"""Core module for Company Website Discovery Tool."""