"""Test package for Company Website Discovery Tool."""