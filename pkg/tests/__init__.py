"""Unit tests for megspike"""
